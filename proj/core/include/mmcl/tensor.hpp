#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmcl/errors.hpp"
#include "mmcl/random.hpp"

namespace mmcl {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;

/// Dense float32 tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap shared handle onto a graph node. Ops record parents and
/// a backward closure only when some input requires grad, so evaluation over
/// constant tensors builds no graph at all. Reductions accumulate in double.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> data);
  static Tensor randn(Shape shape, RngStream& rng, float stddev = 1.0f);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  /// dim(-1) is the last axis.
  int dim(int axis) const;
  std::int64_t numel() const;

  const std::vector<float>& data() const;
  /// Mutable access to the raw buffer. Meant for leaves (parameters, stored
  /// state); mutating an interior graph node invalidates recorded backwards.
  std::vector<float>& raw_data();

  Tensor& set_requires_grad(bool rg);
  bool requires_grad() const;

  /// Gradient buffer; empty until backward() has touched this node.
  const std::vector<float>& grad() const;
  std::vector<float>& raw_grad();
  void zero_grad();

  /// Reverse-mode sweep from a scalar (numel == 1) tensor.
  void backward() const;

  /// Constant copy: same values, no graph, requires_grad off.
  Tensor detach() const;

  float item() const;

  TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_op(Shape shape, std::vector<float> data, const char* op,
                        std::vector<Tensor> parents,
                        std::function<void(TensorNode&)> backward_fn);
};

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // lazily allocated
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  std::int64_t numel() const { return shape_numel(shape); }
  void ensure_grad();
  void add_grad(const std::vector<float>& g);
};

/// Toggle NaN/Inf scanning of op outputs (on by default). Returns previous.
bool set_finite_checks(bool enabled);

namespace ops {

// Element-wise. `b` may have a shape equal to a trailing suffix of `a`'s
// (broadcast over the leading batch axes), e.g. bias adds.
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor scale(Tensor a, float s);

/// a: [..., M, K]; b: [K, N] shared, or [..., K, N] with matching leading dims.
Tensor matmul(Tensor a, Tensor b);

Tensor concat(std::vector<Tensor> parts, int axis);
Tensor slice(Tensor a, int axis, int start, int len);
Tensor reshape(Tensor a, Shape shape);
Tensor transpose(Tensor a, const std::vector<int>& perm);

/// Reduce one axis (the axis is removed from the shape).
Tensor sum(Tensor a, int axis);
Tensor mean(Tensor a, int axis);
/// Full reduction to shape [1].
Tensor sum_all(Tensor a);

/// Softmax over the last axis.
Tensor softmax(Tensor a);
/// Softmax over the last axis with masked columns forced to exactly zero
/// weight. `mask` holds `groups * last_dim` bytes (nonzero = masked); row r of
/// the flattened input uses group r / (rows / groups).
Tensor masked_softmax(Tensor a, const std::vector<std::uint8_t>& mask, int groups);

/// Layer normalization over the last axis with learnable gain/bias.
Tensor layer_norm(Tensor a, Tensor gain, Tensor bias);

Tensor gelu(Tensor a);
Tensor tanh_act(Tensor a);

/// L2 norm over the last axis (axis removed). Zero vectors get zero gradient.
Tensor l2_norm(Tensor a);

/// Pairwise cosine similarity: a [B, d] x b [C, d] -> [B, C].
/// Throws NumericFault on a zero-norm row.
Tensor cosine_similarity(Tensor a, Tensor b);

/// Sum over the batch of -log softmax(logits)[label]. logits: [B, C].
Tensor cross_entropy_logits(Tensor logits, const std::vector<int>& labels);

/// table: [V, d]; ids: B*T entries -> [B, T, d].
Tensor embedding(Tensor table, const std::vector<int>& ids, int batch, int tokens);

/// a: [N, ...]; picks the given leading-axis rows -> [rows.size(), ...].
Tensor gather_rows(Tensor a, const std::vector<int>& rows);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product multi-head attention. Queries come from `q_in`
/// [B, Tq, D]; keys/values from `kv_in` [B, Tk, D]. `key_mask`, when present,
/// holds B*Tk bytes; masked keys receive exactly zero attention weight.
Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, int num_heads,
                            const AttentionWeights& w,
                            const std::vector<std::uint8_t>* key_mask = nullptr);

}  // namespace ops

}  // namespace mmcl
