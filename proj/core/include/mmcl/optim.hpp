#pragma once

#include <string>
#include <vector>

#include "mmcl/tensor.hpp"

namespace mmcl {

/// Named trainable tensor. Freezing a parameter keeps it in the model but
/// rejects optimizer updates.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool t = true)
      : name(std::move(n)), value(std::move(v)), trainable(t) {
    value.set_requires_grad(t);
  }

  void freeze() {
    trainable = false;
    value.set_requires_grad(false);
  }
  std::int64_t numel() const { return value.defined() ? value.numel() : 0; }
};

/// Adam moment buffers plus the hyperparameters they were built for.
struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step_count = 0;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

AdamState make_adam_state(float learning_rate);

/// One Adam step on `param` from its accumulated gradient. Buffers are sized
/// on first use. Throws UsageError if the parameter is frozen.
void adam_update(Parameter& param, AdamState& state);

/// Convenience wrapper stepping a fixed set of parameters together.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Parameter*> params, float learning_rate);

  void step();
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  std::vector<AdamState> states_;
};

}  // namespace mmcl
