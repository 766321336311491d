#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmcl/backbone.hpp"
#include "mmcl/gaussian.hpp"

namespace mmcl {

// ---------------------------------------------------------------------------
// Adapters on the frozen backbone
// ---------------------------------------------------------------------------

/// Paired learnable prompt stacks: P feeds the modality tower, Q the text
/// tower. Both are [prompt_depth, prompt_len, d_model] and start all-zero.
struct PromptPair {
  Tensor P;
  Tensor Q;
};

PromptPair zero_prompts(const EncoderConfig& cfg);

/// Splits a [depth, len, d] stack into per-layer [len, d] views suitable for
/// the encoders. Differentiable.
std::vector<Tensor> prompt_layers(const Tensor& stack);

/// Frozen (or otherwise fixed) base projection plus a low-rank residual:
/// features map through base + delta_A * delta_B. A fresh head has
/// delta_B = 0, so it reproduces the base map exactly.
struct ProjectionHead {
  Tensor base;     // [d_model, d_joint]
  Tensor delta_A;  // [d_model, rank]
  Tensor delta_B;  // [rank, d_joint]
};

/// features [B, d_model] -> [B, d_joint] through base + delta_A*delta_B.
Tensor project(const ProjectionHead& head, const Tensor& features);

/// Element-wise ledger sum of equal-shaped tensors (plain data, no autodiff).
/// An absent `prev` returns `component` unchanged (first occurrence).
Tensor accumulate(const std::optional<Tensor>& prev, const Tensor& component);

// ---------------------------------------------------------------------------
// Relevance gate
// ---------------------------------------------------------------------------

/// One linear layer over raw (prompt-free) modality-encoder features whose
/// softmax scores how relevant each known modality is to an input.
struct RelevanceGate {
  std::vector<std::string> modalities;  // ordered; one output column each
  Parameter weight;                     // [d_model, k]
  Parameter bias;                       // [k]
  bool trained = false;

  /// features [B, d_model] -> softmax weights, B rows of k, plain data.
  std::vector<float> softmax_weights(const Tensor& features) const;
};

struct GateTrainReport {
  float initial_loss = 0.0f;
  float final_loss = 0.0f;
  float train_accuracy = 0.0f;
  int modality_count = 0;
  int samples_per_modality = 0;
};

/// Rebuilds `gate`'s parameters at zero and trains them to classify Gaussian
/// draws: `samples_per_modality` rows are sampled from each entry of `stats`
/// (aligned with gate.modalities) and fit with Adam under cross-entropy.
GateTrainReport train_relevance_gate(RelevanceGate& gate,
                                     const std::vector<const GaussianModel*>& stats,
                                     int samples_per_modality, int steps, float lr,
                                     RngStream& rng);

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

struct CommConfig {
  /// Stirs per-task initialization (the low-rank head factors); stream order
  /// and replay draws are seeded by the caller's streams.
  std::uint64_t seed = 0;
  float lambda_self = 1.0f;
  int head_rank = 4;
  float prompt_lr = 5e-3f;  // Adam rate for (P, Q, head delta) during a task
  int gate_steps = 200;
  float gate_lr = 1e-2f;
  int gate_samples = 128;  // replayed feature draws per modality
  int realign_steps = 100;
  float realign_lr = 5e-3f;
  int realign_samples = 32;  // feature draws per stored class
  /// Master switch for the gate pathway. When off, the gate is never trained
  /// and training/eval composition degenerates to the input's own modality.
  bool use_gate = true;
  /// When false, training composes one-hot on the live modality even though
  /// a gate exists (exposed experiment toggle; default follows the formula).
  bool gate_composition_in_training = true;
};

struct RegisteredClass {
  int class_id = -1;
  std::vector<int> text;  // token ids, text_len entries
  int step = 0;           // time step at which the class was learned
};

/// Everything remembered about one modality: the accumulated prompt and head
/// ledgers, the snapshots backing self-regularization, replay statistics, and
/// the classes seen so far.
struct ModalityState {
  std::string modality;
  int first_step = 0;

  std::optional<Tensor> P_bar;  // [depth, len, d], absent until a task ends
  std::optional<Tensor> Q_bar;
  Tensor head_delta;  // [d_model, d_joint], accumulated low-rank corrections

  // Snapshot of the ledger taken at begin_task; immutable during the task.
  Tensor P_snap, Q_snap;
  Tensor head_delta_snap;
  bool has_history = false;  // true iff the modality finished an earlier task

  GaussianModel raw_stats;                 // prompt-free encoder features
  std::map<int, GaussianModel> class_stats;  // class id -> prompted features
  std::vector<RegisteredClass> registry;   // ordered classes seen
};

/// One arriving task: a set of new classes of one modality.
struct TaskSpec {
  std::string modality;
  std::vector<int> class_ids;
  std::vector<std::vector<int>> class_text;  // aligned with class_ids
};

struct LossBreakdown {
  float task = 0.0f;
  float self = 0.0f;
  float cross = 0.0f;
  float total = 0.0f;
};

struct SelfRegTerms {
  Tensor modality;  // [1]
  Tensor text;      // [1]
  Tensor head;      // [1]
  Tensor total;     // [1]
};

/// Per-sample composed modality prompts plus the weights that built them.
struct ComposedPrompts {
  std::vector<Tensor> layers;        // per prompted layer: [B, prompt_len, d]
  std::vector<float> weights;        // B rows of k, plain
  std::vector<std::string> order;    // weight column -> modality
};

struct RealignReport {
  bool applicable = false;  // had classes from earlier steps
  bool applied = false;     // correction folded into the ledger
  float accuracy_before = 0.0f;
  float accuracy_after = 0.0f;
  int class_count = 0;
};

struct ParameterCount {
  long long trainable = 0;    // live task components
  long long accumulated = 0;  // ledgers + stats + gate across all modalities
};

// ---------------------------------------------------------------------------
// The continual learner
// ---------------------------------------------------------------------------

/// Continual multimodal learner over a frozen two-tower backbone. Each task
/// trains fresh zero-initialized prompt pairs and a low-rank head correction;
/// finished components are element-wise summed into per-modality ledgers.
/// Training inputs mix every known modality's accumulated prompts through a
/// relevance gate; drifting from the previous ledger is penalized through
/// feature-space self-regularization; projection heads are re-aligned against
/// Gaussian-replayed features of earlier classes.
class CommModel {
 public:
  CommModel(Backbone* backbone, const CommConfig& cfg);

  const CommConfig& config() const { return cfg_; }
  Backbone& backbone() { return *backbone_; }
  const Backbone& backbone() const { return *backbone_; }

  // --- state inspection -----------------------------------------------------
  /// Modalities with any observed state, in first-appearance order.
  const std::vector<std::string>& modalities() const { return order_; }
  bool has_state(const std::string& modality) const;
  const ModalityState& state(const std::string& modality) const;
  const RelevanceGate& gate() const { return gate_; }
  int current_step() const { return step_; }
  bool task_active() const { return active_.has_value(); }
  const TaskSpec& active_spec() const;
  /// Live trainable components of the active task (usage error when idle).
  Parameter& task_P();
  Parameter& task_Q();
  Parameter& task_A();
  Parameter& task_B();

  // --- per-step pipeline ----------------------------------------------------
  /// Folds prompt-free encoder features of `tokens` ([B, S, T, d]) into the
  /// modality's replay statistics. Creates the modality state if needed.
  void observe_raw_features(const std::string& modality, const Tensor& tokens);

  /// Rebuilds the gate from scratch over every known modality and trains it
  /// on Gaussian-replayed raw features. Modalities whose statistics hold
  /// fewer than two observations are skipped (with a warning) if they have
  /// never finished a task; it is a usage error if they have.
  GateTrainReport train_gate(RngStream& rng);

  /// Opens task `t` for the spec's modality: snapshots the ledger and creates
  /// fresh trainable components (zero prompts, zero-product head correction).
  void begin_task(int t, const TaskSpec& spec);

  /// One Adam update of the live components on a batch. `tokens` is
  /// [B, S, T, d]; `labels[i]` indexes the active spec's class list.
  LossBreakdown task_step(const Tensor& tokens, const std::vector<int>& labels);

  /// Builds the exact loss graph `task_step` optimizes (task cross-entropy
  /// plus weighted drift penalties) without touching the optimizer. The
  /// scalar depends on the live components, so it is gradient-checkable.
  Tensor task_loss(const Tensor& tokens, const std::vector<int>& labels,
                   LossBreakdown* breakdown = nullptr);

  /// The three drift penalties against the snapshot for the active task.
  /// All-zero (and gradient-free) at a modality's first task.
  SelfRegTerms self_reg_terms(const Tensor& tokens, const std::vector<int>& labels);
  Tensor self_reg_loss(const Tensor& tokens, const std::vector<int>& labels);

  /// Closes the active task: folds the trained components into the ledger,
  /// fits per-class Gaussians of prompted features over each class's training
  /// batch (aligned with the spec's class list), and registers the classes.
  void end_task(const std::vector<Tensor>& class_train_batches);

  /// Fine-tunes a fresh low-rank head correction for `modality` on replayed
  /// features of every class it has seen, scored against all its classes.
  /// The correction is folded in only if sampled-set accuracy does not drop.
  RealignReport realign_heads(const std::string& modality, RngStream& rng);

  // --- composition and evaluation helpers ------------------------------------
  /// Gate-weighted per-sample mix of the accumulated prompt stacks (Eq.-style
  /// cross-modal composition). When `live_modality` is nonempty, that
  /// modality's stack is its live ledger (snapshot + trainable component) and
  /// gradients flow into the trainable part; all other stacks are constants.
  /// Weights are computed from prompt-free features and carry no gradient.
  ComposedPrompts compose_prompts(const Tensor& tokens,
                                  const std::string& live_modality) const;

  /// The live ledger stack (snapshot + trainable component) of the active
  /// task's modality, split per layer. Usage error when no task is active.
  std::vector<Tensor> live_prompt_layers() const;
  std::vector<Tensor> live_text_prompt_layers() const;

  /// Effective projection head of a modality: frozen backbone base plus the
  /// accumulated correction. Plain tensors.
  Tensor effective_head(const std::string& modality) const;

  /// Text embeddings of a modality's registered classes under its accumulated
  /// text prompts, in registry order: [C, d_joint], constant.
  Tensor registered_text_embeddings(const std::string& modality) const;

  /// Embeds arbitrary class token sequences under `modality`'s accumulated
  /// text prompts (Eval mode): [C, d_joint], constant. Agnostic evaluation
  /// scores the whole candidate list through the routed modality's text
  /// pipeline, which needs other modalities' class names under this Q̄.
  Tensor text_embeddings_under(const std::string& modality,
                               const std::vector<std::vector<int>>& texts) const;

  /// Modality whose replay statistics are nearest (Mahalanobis) to each row
  /// of prompt-free features [B, d]. Fallback router when the gate is off.
  std::vector<std::string> nearest_modality_by_stats(const Tensor& features) const;

  ParameterCount parameter_count() const;

  // --- persistence -----------------------------------------------------------
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  struct ActiveTask {
    int step = 0;
    TaskSpec spec;
    Parameter P, Q;       // fresh prompt stacks, zero-initialized
    Parameter A, B;       // low-rank head correction, B starts at zero
    Tensor base_eff;      // backbone base + accumulated delta, constant
    std::vector<int> flat_text;  // class texts flattened for the text tower
    std::optional<AdamOptimizer> opt;
  };

  ModalityState& state_mut(const std::string& modality);
  ModalityState& ensure_state(const std::string& modality);
  Tensor live_stack(bool text) const;        // snapshot + trainable, graph
  Tensor raw_features(const Tensor& tokens) const;  // prompt-free, constant
  SelfRegTerms self_reg_impl(const Tensor& tokens, const std::vector<int>& labels,
                             const Tensor& own_features, const Tensor& live_text) const;
  void check_gate_fresh() const;

  Backbone* backbone_;
  CommConfig cfg_;
  std::vector<std::string> order_;
  std::map<std::string, ModalityState> states_;
  RelevanceGate gate_;
  int step_ = 0;            // last step begun
  int last_begun_step_ = 0;
  std::vector<std::string> begun_this_step_;
  std::optional<ActiveTask> active_;
};

}  // namespace mmcl
