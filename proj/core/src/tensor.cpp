#include "mmcl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace mmcl {

namespace {

bool g_finite_checks = true;

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

void check_shape_positive(const Shape& s) {
  for (int d : s) {
    if (d <= 0) throw ConfigError("tensor shape has non-positive dim: " + shape_str(s));
  }
}

void check_finite(const std::vector<float>& v, const char* op) {
  if (!g_finite_checks) return;
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw NumericFault(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

std::int64_t prod_range(const Shape& s, int from, int to) {
  std::int64_t p = 1;
  for (int i = from; i < to; ++i) p *= s[i];
  return p;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i]) return false;
  }
  return true;
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

bool set_finite_checks(bool enabled) {
  bool prev = g_finite_checks;
  g_finite_checks = enabled;
  return prev;
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(static_cast<std::size_t>(numel()), 0.0f);
}

void TensorNode::add_grad(const std::vector<float>& g) {
  ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor make_op(Shape shape, std::vector<float> data, const char* op,
               std::vector<Tensor> parents, std::function<void(TensorNode&)> backward_fn) {
  check_finite(data, op);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  check_shape_positive(shape);
  std::vector<float> d(static_cast<std::size_t>(shape_numel(shape)), value);
  return make_op(std::move(shape), std::move(d), "leaf", {}, nullptr);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  check_shape_positive(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ConfigError("tensor data size " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  return make_op(std::move(shape), std::move(data), "leaf", {}, nullptr);
}

Tensor Tensor::randn(Shape shape, RngStream& rng, float stddev) {
  check_shape_positive(shape);
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return make_op(std::move(shape), rng.normals(n, stddev), "leaf", {}, nullptr);
}

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return node_->shape;
}

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  int n = static_cast<int>(s.size());
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw UsageError("tensor axis out of range");
  return s[axis];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<float>& Tensor::data() const {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return node_->data;
}

std::vector<float>& Tensor::raw_data() {
  if (!node_) throw UsageError("operation on an undefined tensor");
  return node_->data;
}

Tensor& Tensor::set_requires_grad(bool rg) {
  if (!node_) throw UsageError("operation on an undefined tensor");
  node_->requires_grad = rg;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<float>& Tensor::grad() const {
  if (!node_) throw UsageError("operation on an undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

std::vector<float>& Tensor::raw_grad() {
  if (!node_) throw UsageError("operation on an undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) throw UsageError("operation on an undefined tensor");
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::backward() const {
  if (!node_) throw UsageError("backward on an undefined tensor");
  if (numel() != 1) throw UsageError("backward requires a scalar tensor");
  // Iterative post-order topological sort over the grad-requiring subgraph.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next_parent++].node();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

Tensor Tensor::detach() const {
  if (!node_) throw UsageError("detach on an undefined tensor");
  return make_op(node_->shape, node_->data, "leaf", {}, nullptr);
}

float Tensor::item() const {
  if (numel() != 1) throw UsageError("item() requires a scalar tensor");
  return data()[0];
}

namespace ops {

namespace {

// Shared helper for add/sub/mul with trailing-suffix broadcast on b.
template <typename Fwd, typename BwdA, typename BwdB>
Tensor pointwise2(Tensor a, Tensor b, const char* name, Fwd fwd, BwdA bwd_a,
                  BwdB bwd_b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ConfigError(std::string(name) + ": shape " + shape_str(b.shape()) +
                      " is not a trailing suffix of " + shape_str(a.shape()));
  }
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::size_t bn = bd.size();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i], bd[i % bn]);
  return make_op(a.shape(), std::move(out), name, {a, b},
                 [a, b, bwd_a, bwd_b](TensorNode& self) mutable {
                   const auto& g = self.grad;
                   const auto& ad = a.data();
                   const auto& bd = b.data();
                   std::size_t bn = bd.size();
                   if (a.requires_grad()) {
                     auto& ga = a.raw_grad();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] += bwd_a(g[i], ad[i], bd[i % bn]);
                   }
                   if (b.requires_grad()) {
                     auto& gb = b.raw_grad();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       gb[i % bn] += bwd_b(g[i], ad[i], bd[i % bn]);
                   }
                 });
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
  return pointwise2(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float g, float, float) { return g; }, [](float g, float, float) { return g; });
}

Tensor sub(Tensor a, Tensor b) {
  return pointwise2(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float g, float, float) { return g; }, [](float g, float, float) { return -g; });
}

Tensor mul(Tensor a, Tensor b) {
  return pointwise2(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float g, float, float y) { return g * y; },
      [](float g, float x, float) { return g * x; });
}

Tensor scale(Tensor a, float s) {
  const auto& ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * s;
  return make_op(a.shape(), std::move(out), "scale", {a}, [a, s](TensorNode& self) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Tensor matmul(Tensor a, Tensor b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ConfigError("matmul: operands must have rank >= 2, got " + shape_str(as) + " x " +
                      shape_str(bs));
  }
  int M = as[as.size() - 2];
  int K = as[as.size() - 1];
  int Kb = bs[bs.size() - 2];
  int N = bs[bs.size() - 1];
  if (K != Kb) {
    throw ConfigError("matmul: inner dims differ, " + shape_str(as) + " x " + shape_str(bs));
  }
  std::int64_t batch = prod_range(as, 0, static_cast<int>(as.size()) - 2);
  bool b_shared = bs.size() == 2;
  if (!b_shared) {
    Shape a_lead(as.begin(), as.end() - 2);
    Shape b_lead(bs.begin(), bs.end() - 2);
    if (a_lead != b_lead) {
      throw ConfigError("matmul: batch dims differ, " + shape_str(as) + " x " + shape_str(bs));
    }
  }
  Shape out_shape(as);
  out_shape.back() = N;
  std::vector<float> out(static_cast<std::size_t>(batch) * M * N);
  if (b_shared) {
    MapC am(a.data().data(), batch * M, K);
    MapC bm(b.data().data(), K, N);
    MapM om(out.data(), batch * M, N);
    om.noalias() = am * bm;
  } else {
    for (std::int64_t i = 0; i < batch; ++i) {
      MapC am(a.data().data() + i * M * K, M, K);
      MapC bm(b.data().data() + i * K * N, K, N);
      MapM om(out.data() + i * M * N, M, N);
      om.noalias() = am * bm;
    }
  }
  return make_op(std::move(out_shape), std::move(out), "matmul", {a, b},
                 [a, b, batch, M, K, N, b_shared](TensorNode& self) mutable {
                   const float* g = self.grad.data();
                   if (a.requires_grad()) {
                     auto& ga = a.raw_grad();
                     if (b_shared) {
                       MapC gm(g, batch * M, N);
                       MapC bm(b.data().data(), K, N);
                       MapM gam(ga.data(), batch * M, K);
                       gam.noalias() += gm * bm.transpose();
                     } else {
                       for (std::int64_t i = 0; i < batch; ++i) {
                         MapC gm(g + i * M * N, M, N);
                         MapC bm(b.data().data() + i * K * N, K, N);
                         MapM gam(ga.data() + i * M * K, M, K);
                         gam.noalias() += gm * bm.transpose();
                       }
                     }
                   }
                   if (b.requires_grad()) {
                     auto& gb = b.raw_grad();
                     if (b_shared) {
                       MapC am(a.data().data(), batch * M, K);
                       MapC gm(g, batch * M, N);
                       MapM gbm(gb.data(), K, N);
                       gbm.noalias() += am.transpose() * gm;
                     } else {
                       for (std::int64_t i = 0; i < batch; ++i) {
                         MapC am(a.data().data() + i * M * K, M, K);
                         MapC gm(g + i * M * N, M, N);
                         MapM gbm(gb.data() + i * K * N, K, N);
                         gbm.noalias() += am.transpose() * gm;
                       }
                     }
                   }
                 });
}

Tensor concat(std::vector<Tensor> parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  int nd = static_cast<int>(s0.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw UsageError("concat: axis out of range");
  int axis_total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != nd) {
      throw ConfigError("concat: rank mismatch");
    }
    for (int i = 0; i < nd; ++i) {
      if (i != axis && s[i] != s0[i]) {
        throw ConfigError("concat: shape mismatch at axis " + std::to_string(i) + ": " +
                          shape_str(s) + " vs " + shape_str(s0));
      }
    }
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  std::int64_t outer = prod_range(s0, 0, axis);
  std::int64_t inner = prod_range(s0, axis + 1, nd);
  std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::int64_t out_row = static_cast<std::int64_t>(axis_total) * inner;
  std::int64_t offset = 0;
  for (const Tensor& p : parts) {
    std::int64_t len = static_cast<std::int64_t>(p.shape()[axis]) * inner;
    const float* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * len, src + (o + 1) * len, out.data() + o * out_row + offset);
    }
    offset += len;
  }
  std::vector<Tensor> parents = parts;
  return make_op(std::move(out_shape), std::move(out), "concat", std::move(parents),
                 [parts, outer, inner, axis, out_row](TensorNode& self) mutable {
                   const float* g = self.grad.data();
                   std::int64_t offset = 0;
                   for (Tensor& p : parts) {
                     std::int64_t len = static_cast<std::int64_t>(p.shape()[axis]) * inner;
                     if (p.requires_grad()) {
                       auto& gp = p.raw_grad();
                       for (std::int64_t o = 0; o < outer; ++o) {
                         const float* row = g + o * out_row + offset;
                         float* dst = gp.data() + o * len;
                         for (std::int64_t i = 0; i < len; ++i) dst[i] += row[i];
                       }
                     }
                     offset += len;
                   }
                 });
}

Tensor slice(Tensor a, int axis, int start, int len) {
  const Shape& s = a.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw UsageError("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > s[axis]) {
    throw UsageError("slice: window [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of range for axis size " +
                     std::to_string(s[axis]));
  }
  Shape out_shape = s;
  out_shape[axis] = len;
  std::int64_t outer = prod_range(s, 0, axis);
  std::int64_t inner = prod_range(s, axis + 1, nd);
  std::int64_t in_row = static_cast<std::int64_t>(s[axis]) * inner;
  std::int64_t out_len = static_cast<std::int64_t>(len) * inner;
  std::vector<float> out(static_cast<std::size_t>(outer * out_len));
  const float* src = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(src + o * in_row + start * inner, src + o * in_row + start * inner + out_len,
              out.data() + o * out_len);
  }
  return make_op(std::move(out_shape), std::move(out), "slice", {a},
                 [a, outer, inner, in_row, out_len, start](TensorNode& self) mutable {
                   if (!a.requires_grad()) return;
                   auto& ga = a.raw_grad();
                   const float* g = self.grad.data();
                   for (std::int64_t o = 0; o < outer; ++o) {
                     float* dst = ga.data() + o * in_row + start * inner;
                     const float* row = g + o * out_len;
                     for (std::int64_t i = 0; i < out_len; ++i) dst[i] += row[i];
                   }
                 });
}

Tensor reshape(Tensor a, Shape shape) {
  check_shape_positive(shape);
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                      shape_str(shape));
  }
  std::vector<float> out = a.data();
  return make_op(std::move(shape), std::move(out), "reshape", {a}, [a](TensorNode& self) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// For each flat output index, the corresponding flat input index.
std::vector<std::int64_t> permute_index_map(const Shape& in_shape, const std::vector<int>& perm) {
  Shape out_shape(in_shape.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
  auto in_strides = row_major_strides(in_shape);
  auto out_strides = row_major_strides(out_shape);
  std::int64_t n = shape_numel(in_shape);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t rem = flat;
    std::int64_t src = 0;
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      std::int64_t idx = rem / out_strides[i];
      rem %= out_strides[i];
      src += idx * in_strides[perm[i]];
    }
    map[static_cast<std::size_t>(flat)] = src;
  }
  return map;
}

}  // namespace

Tensor transpose(Tensor a, const std::vector<int>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw UsageError("transpose: permutation rank mismatch");
  std::vector<bool> seen(s.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= static_cast<int>(s.size()) || seen[p]) {
      throw UsageError("transpose: invalid permutation");
    }
    seen[p] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[perm[i]];
  auto map = permute_index_map(s, perm);
  const auto& ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[static_cast<std::size_t>(map[i])];
  auto map_shared = std::make_shared<std::vector<std::int64_t>>(std::move(map));
  return make_op(std::move(out_shape), std::move(out), "transpose", {a},
                 [a, map_shared](TensorNode& self) mutable {
                   if (!a.requires_grad()) return;
                   auto& ga = a.raw_grad();
                   const auto& g = self.grad;
                   const auto& m = *map_shared;
                   for (std::size_t i = 0; i < g.size(); ++i)
                     ga[static_cast<std::size_t>(m[i])] += g[i];
                 });
}

namespace {

Tensor reduce_axis(Tensor a, int axis, bool take_mean, const char* name) {
  const Shape& s = a.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw UsageError(std::string(name) + ": axis out of range");
  std::int64_t outer = prod_range(s, 0, axis);
  std::int64_t len = s[axis];
  std::int64_t inner = prod_range(s, axis + 1, nd);
  Shape out_shape;
  for (int i = 0; i < nd; ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  float w = take_mean ? 1.0f / static_cast<float>(len) : 1.0f;
  std::vector<float> out(static_cast<std::size_t>(outer * inner));
  const float* src = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < len; ++k) acc += src[(o * len + k) * inner + i];
      out[static_cast<std::size_t>(o * inner + i)] = static_cast<float>(acc * w);
    }
  }
  return make_op(std::move(out_shape), std::move(out), name, {a},
                 [a, outer, len, inner, w](TensorNode& self) mutable {
                   if (!a.requires_grad()) return;
                   auto& ga = a.raw_grad();
                   const auto& g = self.grad;
                   for (std::int64_t o = 0; o < outer; ++o) {
                     for (std::int64_t k = 0; k < len; ++k) {
                       for (std::int64_t i = 0; i < inner; ++i) {
                         ga[static_cast<std::size_t>((o * len + k) * inner + i)] +=
                             g[static_cast<std::size_t>(o * inner + i)] * w;
                       }
                     }
                   }
                 });
}

}  // namespace

Tensor sum(Tensor a, int axis) { return reduce_axis(a, axis, false, "sum"); }

Tensor mean(Tensor a, int axis) { return reduce_axis(a, axis, true, "mean"); }

Tensor sum_all(Tensor a) {
  const auto& ad = a.data();
  double acc = 0.0;
  for (float x : ad) acc += x;
  return make_op({1}, {static_cast<float>(acc)}, "sum_all", {a}, [a](TensorNode& self) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    float g = self.grad[0];
    for (float& x : ga) x += g;
  });
}

namespace {

Tensor softmax_impl(Tensor a, const std::vector<std::uint8_t>* mask, int groups,
                    const char* name) {
  const Shape& s = a.shape();
  if (s.empty()) throw UsageError("softmax: rank must be >= 1");
  std::int64_t cols = s.back();
  std::int64_t rows = a.numel() / cols;
  if (mask) {
    if (groups <= 0 || rows % groups != 0) {
      throw UsageError("masked_softmax: groups must divide the row count");
    }
    if (static_cast<std::int64_t>(mask->size()) != groups * cols) {
      throw UsageError("masked_softmax: mask size must be groups * last_dim");
    }
  }
  std::int64_t rows_per_group = mask ? rows / groups : rows;
  const float* src = a.data().data();
  std::vector<float> out(a.data().size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::uint8_t* mrow = mask ? mask->data() + (r / rows_per_group) * cols : nullptr;
    const float* x = src + r * cols;
    float* p = out.data() + r * cols;
    float m = -std::numeric_limits<float>::infinity();
    bool any = false;
    for (std::int64_t j = 0; j < cols; ++j) {
      if (mrow && mrow[j]) continue;
      m = std::max(m, x[j]);
      any = true;
    }
    if (!any) throw NumericFault("softmax row with every column masked");
    double z = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      if (mrow && mrow[j]) {
        p[j] = 0.0f;
      } else {
        p[j] = std::exp(x[j] - m);
        z += p[j];
      }
    }
    float inv = static_cast<float>(1.0 / z);
    for (std::int64_t j = 0; j < cols; ++j) p[j] *= inv;
  }
  Tensor result = make_op(s, std::move(out), name, {a}, nullptr);
  // The backward needs the output; rebuild the closure now that we have it.
  if (a.requires_grad()) {
    TensorNode* rn = result.node();
    rn->parents = {a};
    Tensor a_copy = a;
    rn->backward_fn = [a_copy, rows, cols](TensorNode& self) mutable {
      auto& ga = a_copy.raw_grad();
      const auto& g = self.grad;
      const auto& p = self.data;
      for (std::int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < cols; ++j)
          dot += static_cast<double>(g[r * cols + j]) * p[r * cols + j];
        for (std::int64_t j = 0; j < cols; ++j) {
          std::size_t k = static_cast<std::size_t>(r * cols + j);
          ga[k] += p[k] * (g[k] - static_cast<float>(dot));
        }
      }
    };
  }
  return result;
}

}  // namespace

Tensor softmax(Tensor a) { return softmax_impl(a, nullptr, 0, "softmax"); }

Tensor masked_softmax(Tensor a, const std::vector<std::uint8_t>& mask, int groups) {
  return softmax_impl(a, &mask, groups, "masked_softmax");
}

Tensor layer_norm(Tensor a, Tensor gain, Tensor bias) {
  const Shape& s = a.shape();
  if (s.empty()) throw UsageError("layer_norm: rank must be >= 1");
  std::int64_t d = s.back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ConfigError("layer_norm: gain/bias must have last-axis size " + std::to_string(d));
  }
  std::int64_t rows = a.numel() / d;
  const float eps = 1e-5f;
  const float* x = a.data().data();
  const float* gn = gain.data().data();
  const float* bs = bias.data().data();
  std::vector<float> out(a.data().size());
  auto xhat = std::make_shared<std::vector<float>>(a.data().size());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double c = x[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    for (std::int64_t j = 0; j < d; ++j) {
      std::size_t k = static_cast<std::size_t>(r * d + j);
      (*xhat)[k] = static_cast<float>((x[k] - mu) * inv);
      out[k] = (*xhat)[k] * gn[j] + bs[j];
    }
  }
  return make_op(s, std::move(out), "layer_norm", {a, gain, bias},
                 [a, gain, bias, xhat, inv_std, rows, d](TensorNode& self) mutable {
                   const auto& g = self.grad;
                   const float* gn = gain.data().data();
                   if (gain.requires_grad()) {
                     auto& gg = gain.raw_grad();
                     for (std::int64_t r = 0; r < rows; ++r)
                       for (std::int64_t j = 0; j < d; ++j)
                         gg[static_cast<std::size_t>(j)] +=
                             g[r * d + j] * (*xhat)[static_cast<std::size_t>(r * d + j)];
                   }
                   if (bias.requires_grad()) {
                     auto& gb = bias.raw_grad();
                     for (std::int64_t r = 0; r < rows; ++r)
                       for (std::int64_t j = 0; j < d; ++j)
                         gb[static_cast<std::size_t>(j)] += g[r * d + j];
                   }
                   if (a.requires_grad()) {
                     auto& ga = a.raw_grad();
                     for (std::int64_t r = 0; r < rows; ++r) {
                       double mean_dxhat = 0.0;
                       double mean_dxhat_xhat = 0.0;
                       for (std::int64_t j = 0; j < d; ++j) {
                         std::size_t k = static_cast<std::size_t>(r * d + j);
                         double dxh = static_cast<double>(g[k]) * gn[j];
                         mean_dxhat += dxh;
                         mean_dxhat_xhat += dxh * (*xhat)[k];
                       }
                       mean_dxhat /= static_cast<double>(d);
                       mean_dxhat_xhat /= static_cast<double>(d);
                       float inv = (*inv_std)[static_cast<std::size_t>(r)];
                       for (std::int64_t j = 0; j < d; ++j) {
                         std::size_t k = static_cast<std::size_t>(r * d + j);
                         double dxh = static_cast<double>(g[k]) * gn[j];
                         ga[k] += static_cast<float>(
                             inv * (dxh - mean_dxhat - (*xhat)[k] * mean_dxhat_xhat));
                       }
                     }
                   }
                 });
}

namespace {

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

float gelu_fwd(float x) {
  float t = std::tanh(kGeluC * (x + 0.044715f * x * x * x));
  return 0.5f * x * (1.0f + t);
}

float gelu_bwd(float x) {
  float u = kGeluC * (x + 0.044715f * x * x * x);
  float t = std::tanh(u);
  float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

}  // namespace

Tensor gelu(Tensor a) {
  const auto& ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = gelu_fwd(ad[i]);
  return make_op(a.shape(), std::move(out), "gelu", {a}, [a](TensorNode& self) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    const auto& g = self.grad;
    const auto& ad = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_bwd(ad[i]);
  });
}

Tensor tanh_act(Tensor a) {
  const auto& ad = a.data();
  std::vector<float> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = std::tanh(ad[i]);
  return make_op(a.shape(), std::move(out), "tanh", {a}, [a](TensorNode& self) mutable {
    if (!a.requires_grad()) return;
    auto& ga = a.raw_grad();
    const auto& g = self.grad;
    const auto& y = self.data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0f - y[i] * y[i]);
  });
}

Tensor l2_norm(Tensor a) {
  const Shape& s = a.shape();
  if (s.empty()) throw UsageError("l2_norm: rank must be >= 1");
  std::int64_t d = s.back();
  std::int64_t rows = a.numel() / d;
  Shape out_shape(s.begin(), s.end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  const float* x = a.data().data();
  std::vector<float> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double v = x[r * d + j];
      acc += v * v;
    }
    out[static_cast<std::size_t>(r)] = static_cast<float>(std::sqrt(acc));
  }
  return make_op(std::move(out_shape), std::move(out), "l2_norm", {a},
                 [a, rows, d](TensorNode& self) mutable {
                   if (!a.requires_grad()) return;
                   auto& ga = a.raw_grad();
                   const auto& g = self.grad;
                   const auto& nrm = self.data;
                   const auto& x = a.data();
                   for (std::int64_t r = 0; r < rows; ++r) {
                     float n = nrm[static_cast<std::size_t>(r)];
                     if (n == 0.0f) continue;  // subgradient 0 at the origin
                     float c = g[static_cast<std::size_t>(r)] / n;
                     for (std::int64_t j = 0; j < d; ++j) {
                       std::size_t k = static_cast<std::size_t>(r * d + j);
                       ga[k] += c * x[k];
                     }
                   }
                 });
}

Tensor cosine_similarity(Tensor a, Tensor b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
    throw ConfigError("cosine_similarity: expected [B,d] x [C,d], got " + shape_str(a.shape()) +
                      " x " + shape_str(b.shape()));
  }
  std::int64_t B = a.dim(0), C = b.dim(0), d = a.dim(1);
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  auto na = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B));
  auto nb = std::make_shared<std::vector<float>>(static_cast<std::size_t>(C));
  auto row_norms = [d](const float* p, std::int64_t n, std::vector<float>& out,
                       const char* side) {
    for (std::int64_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        double v = p[r * d + j];
        acc += v * v;
      }
      if (acc == 0.0) {
        throw NumericFault(std::string("cosine_similarity: zero-norm ") + side + " row " +
                           std::to_string(r));
      }
      out[static_cast<std::size_t>(r)] = static_cast<float>(std::sqrt(acc));
    }
  };
  row_norms(ad, B, *na, "left");
  row_norms(bd, C, *nb, "right");
  std::vector<float> out(static_cast<std::size_t>(B * C));
  for (std::int64_t i = 0; i < B; ++i) {
    for (std::int64_t j = 0; j < C; ++j) {
      double dot = 0.0;
      for (std::int64_t k = 0; k < d; ++k) dot += static_cast<double>(ad[i * d + k]) * bd[j * d + k];
      out[static_cast<std::size_t>(i * C + j)] =
          static_cast<float>(dot / (static_cast<double>((*na)[i]) * (*nb)[j]));
    }
  }
  return make_op({static_cast<int>(B), static_cast<int>(C)}, std::move(out), "cosine_similarity",
                 {a, b}, [a, b, na, nb, B, C, d](TensorNode& self) mutable {
                   const auto& g = self.grad;
                   const auto& sim = self.data;
                   const auto& ad = a.data();
                   const auto& bd = b.data();
                   if (a.requires_grad()) {
                     auto& ga = a.raw_grad();
                     for (std::int64_t i = 0; i < B; ++i) {
                       double sum_gs = 0.0;
                       for (std::int64_t j = 0; j < C; ++j)
                         sum_gs += static_cast<double>(g[i * C + j]) * sim[i * C + j];
                       float inv_na = 1.0f / (*na)[static_cast<std::size_t>(i)];
                       for (std::int64_t k = 0; k < d; ++k) {
                         double acc = 0.0;
                         for (std::int64_t j = 0; j < C; ++j) {
                           acc += static_cast<double>(g[i * C + j]) * bd[j * d + k] /
                                  (*nb)[static_cast<std::size_t>(j)];
                         }
                         ga[static_cast<std::size_t>(i * d + k)] += static_cast<float>(
                             inv_na * (acc - sum_gs * ad[i * d + k] * inv_na));
                       }
                     }
                   }
                   if (b.requires_grad()) {
                     auto& gb = b.raw_grad();
                     for (std::int64_t j = 0; j < C; ++j) {
                       double sum_gs = 0.0;
                       for (std::int64_t i = 0; i < B; ++i)
                         sum_gs += static_cast<double>(g[i * C + j]) * sim[i * C + j];
                       float inv_nb = 1.0f / (*nb)[static_cast<std::size_t>(j)];
                       for (std::int64_t k = 0; k < d; ++k) {
                         double acc = 0.0;
                         for (std::int64_t i = 0; i < B; ++i) {
                           acc += static_cast<double>(g[i * C + j]) * ad[i * d + k] /
                                  (*na)[static_cast<std::size_t>(i)];
                         }
                         gb[static_cast<std::size_t>(j * d + k)] += static_cast<float>(
                             inv_nb * (acc - sum_gs * bd[j * d + k] * inv_nb));
                       }
                     }
                   }
                 });
}

Tensor cross_entropy_logits(Tensor logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw ConfigError("cross_entropy_logits: expected [B,C], got " + shape_str(logits.shape()));
  }
  std::int64_t B = logits.dim(0), C = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw UsageError("cross_entropy_logits: label count mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= C) throw UsageError("cross_entropy_logits: label out of range");
  }
  const float* x = logits.data().data();
  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(B * C));
  double loss = 0.0;
  for (std::int64_t i = 0; i < B; ++i) {
    float m = x[i * C];
    for (std::int64_t j = 1; j < C; ++j) m = std::max(m, x[i * C + j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < C; ++j) {
      double e = std::exp(static_cast<double>(x[i * C + j]) - m);
      (*probs)[static_cast<std::size_t>(i * C + j)] = static_cast<float>(e);
      z += e;
    }
    double inv = 1.0 / z;
    for (std::int64_t j = 0; j < C; ++j)
      (*probs)[static_cast<std::size_t>(i * C + j)] = static_cast<float>(
          (*probs)[static_cast<std::size_t>(i * C + j)] * inv);
    loss += std::log(z) + m - x[i * C + labels[static_cast<std::size_t>(i)]];
  }
  auto labels_shared = std::make_shared<std::vector<int>>(labels);
  return make_op({1}, {static_cast<float>(loss)}, "cross_entropy_logits", {logits},
                 [logits, probs, labels_shared, B, C](TensorNode& self) mutable {
                   if (!logits.requires_grad()) return;
                   auto& gl = logits.raw_grad();
                   float g = self.grad[0];
                   for (std::int64_t i = 0; i < B; ++i) {
                     for (std::int64_t j = 0; j < C; ++j) {
                       float p = (*probs)[static_cast<std::size_t>(i * C + j)];
                       float target =
                           (j == (*labels_shared)[static_cast<std::size_t>(i)]) ? 1.0f : 0.0f;
                       gl[static_cast<std::size_t>(i * C + j)] += g * (p - target);
                     }
                   }
                 });
}

Tensor embedding(Tensor table, const std::vector<int>& ids, int batch, int tokens) {
  if (table.ndim() != 2) {
    throw ConfigError("embedding: table must be [V,d], got " + shape_str(table.shape()));
  }
  if (static_cast<std::int64_t>(ids.size()) != static_cast<std::int64_t>(batch) * tokens) {
    throw UsageError("embedding: ids size must be batch * tokens");
  }
  std::int64_t V = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= V) {
      throw DataError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(V));
    }
  }
  const float* t = table.data().data();
  std::vector<float> out(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(t + static_cast<std::int64_t>(ids[i]) * d, t + (static_cast<std::int64_t>(ids[i]) + 1) * d,
              out.data() + static_cast<std::int64_t>(i) * d);
  }
  auto ids_shared = std::make_shared<std::vector<int>>(ids);
  return make_op({batch, tokens, static_cast<int>(d)}, std::move(out), "embedding", {table},
                 [table, ids_shared, d](TensorNode& self) mutable {
                   if (!table.requires_grad()) return;
                   auto& gt = table.raw_grad();
                   const auto& g = self.grad;
                   const auto& ids = *ids_shared;
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     for (std::int64_t j = 0; j < d; ++j) {
                       gt[static_cast<std::size_t>(static_cast<std::int64_t>(ids[i]) * d + j)] +=
                           g[static_cast<std::size_t>(static_cast<std::int64_t>(i) * d + j)];
                     }
                   }
                 });
}

Tensor gather_rows(Tensor a, const std::vector<int>& rows) {
  if (a.ndim() < 1) throw UsageError("gather_rows: input must have rank >= 1");
  if (rows.empty()) throw UsageError("gather_rows: empty row list");
  const Shape& s = a.shape();
  int n = s[0];
  std::int64_t inner = prod_range(s, 1, static_cast<int>(s.size()));
  for (int r : rows) {
    if (r < 0 || r >= n) throw UsageError("gather_rows: row index out of range");
  }
  Tensor flat = ops::reshape(a, {n, static_cast<int>(inner)});
  Tensor picked = ops::embedding(flat, rows, static_cast<int>(rows.size()), 1);
  Shape out_shape = s;
  out_shape[0] = static_cast<int>(rows.size());
  return ops::reshape(picked, std::move(out_shape));
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, int num_heads,
                            const AttentionWeights& w, const std::vector<std::uint8_t>* key_mask) {
  if (q_in.ndim() != 3 || kv_in.ndim() != 3) {
    throw ConfigError("attention: inputs must be [B,T,D]");
  }
  int B = q_in.dim(0);
  int Tq = q_in.dim(1);
  int D = q_in.dim(2);
  int Tk = kv_in.dim(1);
  if (kv_in.dim(0) != B || kv_in.dim(2) != D) {
    throw ConfigError("attention: query/key batch or model dims differ");
  }
  if (num_heads <= 0 || D % num_heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(D) +
                      " not divisible by head count " + std::to_string(num_heads));
  }
  int dh = D / num_heads;
  if (key_mask && static_cast<std::int64_t>(key_mask->size()) !=
                      static_cast<std::int64_t>(B) * Tk) {
    throw UsageError("attention: key mask must have B*Tk entries");
  }
  auto project = [&](const Tensor& x, const Tensor& wt, const Tensor& bias, int T) {
    Tensor p = add(matmul(x, wt), bias);                      // [B,T,D]
    p = reshape(p, {B, T, num_heads, dh});
    return transpose(p, {0, 2, 1, 3});                        // [B,H,T,dh]
  };
  Tensor q = project(q_in, w.wq, w.bq, Tq);
  Tensor k = project(kv_in, w.wk, w.bk, Tk);
  Tensor v = project(kv_in, w.wv, w.bv, Tk);
  Tensor scores = matmul(q, transpose(k, {0, 1, 3, 2}));      // [B,H,Tq,Tk]
  scores = scale(scores, 1.0f / std::sqrt(static_cast<float>(dh)));
  Tensor attn = key_mask ? masked_softmax(scores, *key_mask, B) : softmax(scores);
  Tensor ctx = matmul(attn, v);                               // [B,H,Tq,dh]
  ctx = transpose(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {B, Tq, D});
  return add(matmul(ctx, w.wo), w.bo);
}

}  // namespace ops

}  // namespace mmcl
