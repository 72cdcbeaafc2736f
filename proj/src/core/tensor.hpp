#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "core/error.hpp"

namespace trompt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Graph;

// Dense row-major tensor. Buffers are immutable once an op has produced
// them; recorded tensors additionally carry a handle into the tape that
// produced them. Plain (unrecorded) tensors are safe to share across
// threads.
template <typename T>
class Tensor {
 public:
  Tensor() : buf_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (buf_->size() != shape_numel(shape_))
      throw_internal("tensor literal: " + std::to_string(buf_->size()) +
                     " values for shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.buf_->begin(), t.buf_->end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return buf_->size(); }
  bool is_scalar() const { return buf_->size() == 1; }

  const T* data() const { return buf_->data(); }
  const std::vector<T>& values() const { return *buf_; }
  T at(std::size_t i) const { return (*buf_)[i]; }
  T item() const {
    if (!is_scalar()) throw_internal("item() on non-scalar " + shape_str(shape_));
    return (*buf_)[0];
  }

  // Mutable access, for building leaf values only. Must not be used on a
  // tensor after it has been recorded or handed to an op.
  T* mutable_data() { return buf_->data(); }

  bool recorded() const { return graph_ != nullptr; }
  Graph<T>* graph() const { return graph_; }
  int node() const { return node_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> buf_;
  Graph<T>* graph_ = nullptr;
  int node_ = -1;

  friend class Graph<T>;
};

enum class Op : std::uint8_t {
  Leaf,
  BatchedMatmul,
  BatchedTranspose,
  SoftmaxLastAxis,
  Add,
  MulBroadcast,
  Relu,
  StackBatch,
  ConcatLastAxis,
  ReduceSumAxis,
  Reshape,
  SwapMiddleAxes,
  GatherRows,
  Scale,
  CrossEntropy,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::BatchedMatmul: return "batched_matmul";
    case Op::BatchedTranspose: return "batched_transpose";
    case Op::SoftmaxLastAxis: return "softmax_last_axis";
    case Op::Add: return "add";
    case Op::MulBroadcast: return "mul_broadcast";
    case Op::Relu: return "relu";
    case Op::StackBatch: return "stack_batch";
    case Op::ConcatLastAxis: return "concat_last_axis";
    case Op::ReduceSumAxis: return "reduce_sum_axis";
    case Op::Reshape: return "reshape";
    case Op::SwapMiddleAxes: return "swap_middle_axes";
    case Op::GatherRows: return "gather_rows";
    case Op::Scale: return "scale";
    case Op::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

// Append-only tape. A node's inputs always have smaller ids, so append
// order is a topological order and backward is a single reverse sweep.
template <typename T>
class Graph {
 public:
  struct Node {
    Op op;
    std::array<int, 2> in{-1, -1};
    Shape shape;
    std::shared_ptr<std::vector<T>> value;
    bool needs_grad = false;
    std::size_t axis = 0;  // ReduceSumAxis axis / StackBatch count
    T factor = T(0);       // Scale
    std::shared_ptr<std::vector<std::size_t>> indices;  // GatherRows / CrossEntropy
  };

  // Records `value` as a leaf. Parameters pass requires_grad=true.
  Tensor<T> leaf(const Tensor<T>& value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.shape = value.shape();
    n.value = value.buf_;
    n.needs_grad = requires_grad;
    return append(std::move(n));
  }

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node_at(std::size_t i) const { return nodes_[i]; }

  // dLoss/dNode for every requires_grad leaf (zeros when the leaf does not
  // reach the loss). Loss must be a recorded scalar.
  std::unordered_map<int, Tensor<T>> backward(const Tensor<T>& loss) {
    if (!loss.recorded() || loss.graph() != this)
      throw_internal("backward: loss is not recorded on this graph");
    if (!loss.is_scalar())
      throw_internal("backward: loss must be scalar, got " +
                     shape_str(loss.shape()));

    std::vector<std::vector<T>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.node())] = {T(1)};

    for (int id = loss.node(); id >= 0; --id) {
      auto& g = grads[static_cast<std::size_t>(id)];
      if (g.empty()) continue;
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.op == Op::Leaf || !n.needs_grad) continue;
      backprop_node(n, g, grads);
    }

    std::unordered_map<int, Tensor<T>> out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.op != Op::Leaf || !n.needs_grad) continue;
      auto& g = grads[id];
      Tensor<T> t;
      if (g.empty()) {
        t = Tensor<T>(n.shape);
      } else {
        t = Tensor<T>(n.shape, std::move(g));
      }
      out.emplace(static_cast<int>(id), std::move(t));
    }
    return out;
  }

  // Used by the op free functions. Inputs that are plain values are
  // recorded as constant leaves on the fly.
  Tensor<T> record(Op op, std::initializer_list<const Tensor<T>*> ins,
                   Shape shape, std::shared_ptr<std::vector<T>> value,
                   std::size_t axis = 0, T factor = T(0),
                   std::shared_ptr<std::vector<std::size_t>> indices = nullptr) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.axis = axis;
    n.factor = factor;
    n.indices = std::move(indices);
    int slot = 0;
    for (const Tensor<T>* t : ins) {
      int id;
      if (t->recorded()) {
        if (t->graph() != this)
          throw_internal("op mixes tensors from two graphs");
        id = t->node();
      } else {
        Node leaf_node;
        leaf_node.op = Op::Leaf;
        leaf_node.shape = t->shape();
        leaf_node.value = t->buf_;
        nodes_.push_back(std::move(leaf_node));
        id = static_cast<int>(nodes_.size() - 1);
      }
      n.in[slot++] = id;
      n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(id)].needs_grad;
    }
    return append(std::move(n));
  }

 private:
  std::vector<Node> nodes_;

  Tensor<T> append(Node n) {
    nodes_.push_back(std::move(n));
    const Node& stored = nodes_.back();
    Tensor<T> t;
    t.shape_ = stored.shape;
    t.buf_ = stored.value;
    t.graph_ = this;
    t.node_ = static_cast<int>(nodes_.size() - 1);
    return t;
  }

  std::vector<T>& grad_slot(int id, std::vector<std::vector<T>>& grads) {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty())
      g.assign(shape_numel(nodes_[static_cast<std::size_t>(id)].shape), T(0));
    return g;
  }

  bool input_wants_grad(int id) const {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad;
  }

  void backprop_node(const Node& n, const std::vector<T>& g,
                     std::vector<std::vector<T>>& grads) {
    const Node* a = n.in[0] >= 0 ? &nodes_[static_cast<std::size_t>(n.in[0])] : nullptr;
    const Node* b = n.in[1] >= 0 ? &nodes_[static_cast<std::size_t>(n.in[1])] : nullptr;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::BatchedMatmul: {
        const Shape& sa = a->shape;
        const Shape& sb = b->shape;
        std::size_t batch = sa[0], m = sa[1], k = sa[2], nn = sb[2];
        const T* av = a->value->data();
        const T* bv = b->value->data();
        if (input_wants_grad(n.in[0])) {
          auto& da = grad_slot(n.in[0], grads);
          for (std::size_t bb = 0; bb < batch; ++bb) {
            const T* gb = g.data() + bb * m * nn;
            const T* bb_v = bv + bb * k * nn;
            T* da_b = da.data() + bb * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t t = 0; t < k; ++t) {
                T acc = T(0);
                const T* grow = gb + i * nn;
                const T* brow = bb_v + t * nn;
                for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
                da_b[i * k + t] += acc;
              }
          }
        }
        if (input_wants_grad(n.in[1])) {
          auto& db = grad_slot(n.in[1], grads);
          for (std::size_t bb = 0; bb < batch; ++bb) {
            const T* gb = g.data() + bb * m * nn;
            const T* aa_v = av + bb * m * k;
            T* db_b = db.data() + bb * k * nn;
            for (std::size_t i = 0; i < m; ++i) {
              const T* grow = gb + i * nn;
              const T* arow = aa_v + i * k;
              for (std::size_t t = 0; t < k; ++t) {
                T aval = arow[t];
                T* drow = db_b + t * nn;
                for (std::size_t j = 0; j < nn; ++j) drow[j] += aval * grow[j];
              }
            }
          }
        }
        break;
      }
      case Op::BatchedTranspose: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        const Shape& so = n.shape;  // [..., r, c]; input is [..., c, r]
        std::size_t c = so[so.size() - 1];
        std::size_t r = so[so.size() - 2];
        std::size_t batch = shape_numel(so) / (r * c);
        for (std::size_t bb = 0; bb < batch; ++bb) {
          const T* gb = g.data() + bb * r * c;
          T* da_b = da.data() + bb * r * c;
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              da_b[j * r + i] += gb[i * c + j];
        }
        break;
      }
      case Op::SoftmaxLastAxis: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        const T* y = n.value->data();
        std::size_t width = n.shape.back();
        std::size_t slices = shape_numel(n.shape) / width;
        for (std::size_t s = 0; s < slices; ++s) {
          const T* ys = y + s * width;
          const T* gs = g.data() + s * width;
          T dot = T(0);
          for (std::size_t j = 0; j < width; ++j) dot += gs[j] * ys[j];
          T* ds = da.data() + s * width;
          for (std::size_t j = 0; j < width; ++j) ds[j] += ys[j] * (gs[j] - dot);
        }
        break;
      }
      case Op::Add: {
        for (int side = 0; side < 2; ++side) {
          if (!input_wants_grad(n.in[side])) continue;
          auto& d = grad_slot(n.in[side], grads);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        break;
      }
      case Op::MulBroadcast: {
        // axis stores the broadcast width: out[i] = a[i] * b[i / width]
        // (width == 1 means shapes are equal).
        std::size_t width = n.axis;
        const T* av = a->value->data();
        const T* bv = b->value->data();
        if (input_wants_grad(n.in[0])) {
          auto& da = grad_slot(n.in[0], grads);
          for (std::size_t i = 0; i < g.size(); ++i)
            da[i] += g[i] * bv[i / width];
        }
        if (input_wants_grad(n.in[1])) {
          auto& db = grad_slot(n.in[1], grads);
          for (std::size_t i = 0; i < g.size(); ++i)
            db[i / width] += g[i] * av[i];
        }
        break;
      }
      case Op::Relu: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        const T* x = a->value->data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > T(0)) da[i] += g[i];
        break;
      }
      case Op::StackBatch: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        std::size_t inner = da.size();
        std::size_t copies = n.axis;
        for (std::size_t c = 0; c < copies; ++c) {
          const T* gc = g.data() + c * inner;
          for (std::size_t i = 0; i < inner; ++i) da[i] += gc[i];
        }
        break;
      }
      case Op::ConcatLastAxis: {
        std::size_t wa = a->shape.back();
        std::size_t wb = b->shape.back();
        std::size_t w = wa + wb;
        std::size_t slices = shape_numel(n.shape) / w;
        if (input_wants_grad(n.in[0])) {
          auto& da = grad_slot(n.in[0], grads);
          for (std::size_t s = 0; s < slices; ++s)
            for (std::size_t j = 0; j < wa; ++j)
              da[s * wa + j] += g[s * w + j];
        }
        if (input_wants_grad(n.in[1])) {
          auto& db = grad_slot(n.in[1], grads);
          for (std::size_t s = 0; s < slices; ++s)
            for (std::size_t j = 0; j < wb; ++j)
              db[s * wb + j] += g[s * w + wa + j];
        }
        break;
      }
      case Op::ReduceSumAxis: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        const Shape& si = a->shape;
        std::size_t axis = n.axis;
        std::size_t axis_len = si[axis];
        std::size_t inner = 1;
        for (std::size_t i = axis + 1; i < si.size(); ++i) inner *= si[i];
        std::size_t outer = shape_numel(si) / (axis_len * inner);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t aidx = 0; aidx < axis_len; ++aidx) {
            T* drow = da.data() + (o * axis_len + aidx) * inner;
            const T* grow = g.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) drow[i] += grow[i];
          }
        break;
      }
      case Op::Reshape: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        break;
      }
      case Op::SwapMiddleAxes: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        // out shape [A, Y, X, D] from input [A, X, Y, D]
        std::size_t A = n.shape[0], Y = n.shape[1], X = n.shape[2], D = n.shape[3];
        for (std::size_t aa = 0; aa < A; ++aa)
          for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) {
              const T* grow = g.data() + ((aa * Y + y) * X + x) * D;
              T* drow = da.data() + ((aa * X + x) * Y + y) * D;
              for (std::size_t i = 0; i < D; ++i) drow[i] += grow[i];
            }
        break;
      }
      case Op::GatherRows: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        std::size_t width = a->shape[1];
        const auto& idx = *n.indices;
        for (std::size_t r = 0; r < idx.size(); ++r) {
          const T* grow = g.data() + r * width;
          T* drow = da.data() + idx[r] * width;
          for (std::size_t j = 0; j < width; ++j) drow[j] += grow[j];
        }
        break;
      }
      case Op::Scale: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.factor;
        break;
      }
      case Op::CrossEntropy: {
        if (!input_wants_grad(n.in[0])) break;
        auto& da = grad_slot(n.in[0], grads);
        const Shape& sl = a->shape;
        std::size_t batch = sl[0], classes = sl[1];
        const T* logits = a->value->data();
        const auto& labels = *n.indices;
        T upstream = g[0] / static_cast<T>(batch);
        for (std::size_t r = 0; r < batch; ++r) {
          const T* row = logits + r * classes;
          T mx = row[0];
          for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
          T denom = T(0);
          for (std::size_t j = 0; j < classes; ++j) denom += std::exp(row[j] - mx);
          T* drow = da.data() + r * classes;
          for (std::size_t j = 0; j < classes; ++j) {
            T p = std::exp(row[j] - mx) / denom;
            drow[j] += upstream * (p - (j == labels[r] ? T(1) : T(0)));
          }
        }
        break;
      }
    }
  }
};

namespace detail {

template <typename T>
inline void check_finite(Op op, const std::vector<T>& v) {
  for (const T& x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw_numeric(std::string("non-finite value produced by ") + op_name(op));
}

template <typename T>
inline Graph<T>* common_graph(std::initializer_list<const Tensor<T>*> ts) {
  Graph<T>* g = nullptr;
  for (const Tensor<T>* t : ts) {
    if (!t->recorded()) continue;
    if (g == nullptr) {
      g = t->graph();
    } else if (g != t->graph()) {
      throw_internal("op mixes tensors from two graphs");
    }
  }
  return g;
}

template <typename T>
inline Tensor<T> emit(Op op, std::initializer_list<const Tensor<T>*> ins,
                      Shape shape, std::vector<T> value, std::size_t axis = 0,
                      T factor = T(0),
                      std::shared_ptr<std::vector<std::size_t>> indices = nullptr) {
  check_finite(op, value);
  Graph<T>* g = common_graph<T>(ins);
  if (g == nullptr) return Tensor<T>(std::move(shape), std::move(value));
  return g->record(op, ins, std::move(shape),
                   std::make_shared<std::vector<T>>(std::move(value)), axis,
                   factor, std::move(indices));
}

}  // namespace detail

// ---- primitive ops ----

// [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw_usage("batched_matmul: incompatible shapes " + shape_str(sa) +
                " and " + shape_str(sb));
  std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
  std::vector<T> out(batch * m * n, T(0));
  const T* av = a.data();
  const T* bv = b.data();
  for (std::size_t bb = 0; bb < batch; ++bb) {
    const T* ab = av + bb * m * k;
    const T* bbv = bv + bb * k * n;
    T* ob = out.data() + bb * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* orow = ob + i * n;
      const T* arow = ab + i * k;
      for (std::size_t t = 0; t < k; ++t) {
        T aval = arow[t];
        const T* brow = bbv + t * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
      }
    }
  }
  return detail::emit<T>(Op::BatchedMatmul, {&a, &b}, Shape{batch, m, n},
                         std::move(out));
}

// Swaps the last two axes; rank must be >= 3.
template <typename T>
Tensor<T> batched_transpose(const Tensor<T>& a) {
  const Shape& s = a.shape();
  if (s.size() < 3)
    throw_usage("batched_transpose: rank must be >= 3, got " + shape_str(s));
  std::size_t c = s[s.size() - 1];
  std::size_t r = s[s.size() - 2];
  std::size_t batch = shape_numel(s) / (r * c);
  Shape so(s);
  std::swap(so[so.size() - 1], so[so.size() - 2]);
  std::vector<T> out(a.size());
  const T* av = a.data();
  for (std::size_t bb = 0; bb < batch; ++bb) {
    const T* ab = av + bb * r * c;
    T* ob = out.data() + bb * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ob[j * r + i] = ab[i * c + j];
  }
  return detail::emit<T>(Op::BatchedTranspose, {&a}, std::move(so),
                         std::move(out));
}

// Max-subtracted softmax over the last axis.
template <typename T>
Tensor<T> softmax_last_axis(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0)
    throw_usage("softmax_last_axis: empty last axis");
  std::size_t width = s.back();
  std::size_t slices = x.size() / width;
  std::vector<T> out(x.size());
  const T* xv = x.data();
  for (std::size_t sl = 0; sl < slices; ++sl) {
    const T* row = xv + sl * width;
    T* orow = out.data() + sl * width;
    T mx = row[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < width; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (std::size_t j = 0; j < width; ++j) orow[j] /= denom;
  }
  return detail::emit<T>(Op::SoftmaxLastAxis, {&x}, s, std::move(out));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw_usage("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  std::vector<T> out(a.size());
  const T* av = a.data();
  const T* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::emit<T>(Op::Add, {&a, &b}, a.shape(), std::move(out));
}

// Elementwise product. Shapes must be equal, or b's shape must equal a's
// with the last axis replaced by 1 (the trailing-singleton broadcast of
// the output equation). No other broadcasting exists.
template <typename T>
Tensor<T> mul_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  std::size_t width = 0;
  if (sa == sb) {
    width = 1;
  } else if (sa.size() == sb.size() && !sa.empty() && sb.back() == 1 &&
             std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    width = sa.back();
  } else {
    throw_usage("mul_broadcast: shapes " + shape_str(sa) + " and " +
                shape_str(sb) + " are not broadcastable");
  }
  std::vector<T> out(a.size());
  const T* av = a.data();
  const T* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i / width];
  return detail::emit<T>(Op::MulBroadcast, {&a, &b}, sa, std::move(out), width);
}

// relu; the subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return detail::emit<T>(Op::Relu, {&x}, x.shape(), std::move(out));
}

// Replicates `x` `copies` times along a new leading axis.
template <typename T>
Tensor<T> stack_batch(const Tensor<T>& x, std::size_t copies) {
  if (copies == 0) throw_usage("stack_batch: zero copies");
  Shape so;
  so.reserve(x.rank() + 1);
  so.push_back(copies);
  for (std::size_t d : x.shape()) so.push_back(d);
  std::vector<T> out(copies * x.size());
  const T* xv = x.data();
  for (std::size_t c = 0; c < copies; ++c)
    std::copy(xv, xv + x.size(), out.data() + c * x.size());
  return detail::emit<T>(Op::StackBatch, {&x}, std::move(so), std::move(out),
                         copies);
}

template <typename T>
Tensor<T> concat_last_axis(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sb.empty() || sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw_usage("concat_last_axis: shapes " + shape_str(sa) + " and " +
                shape_str(sb) + " differ off the last axis");
  std::size_t wa = sa.back(), wb = sb.back();
  if (wa == 0 || wb == 0) throw_usage("concat_last_axis: empty last axis");
  Shape so(sa);
  so.back() = wa + wb;
  std::size_t slices = a.size() / wa;
  std::vector<T> out(shape_numel(so));
  const T* av = a.data();
  const T* bv = b.data();
  for (std::size_t s = 0; s < slices; ++s) {
    std::copy(av + s * wa, av + (s + 1) * wa, out.data() + s * (wa + wb));
    std::copy(bv + s * wb, bv + (s + 1) * wb, out.data() + s * (wa + wb) + wa);
  }
  return detail::emit<T>(Op::ConcatLastAxis, {&a, &b}, std::move(so),
                         std::move(out));
}

// Sums out one axis; the result drops that axis (a rank-1 input reduces
// to a rank-0 scalar).
template <typename T>
Tensor<T> reduce_sum_axis(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size())
    throw_usage("reduce_sum_axis: axis " + std::to_string(axis) +
                " out of range for " + shape_str(s));
  Shape so;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) so.push_back(s[i]);
  std::size_t axis_len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::size_t outer = x.size() / (axis_len * inner);
  std::vector<T> out(outer * inner, T(0));
  const T* xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t a2 = 0; a2 < axis_len; ++a2) {
      const T* row = xv + (o * axis_len + a2) * inner;
      T* orow = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) orow[i] += row[i];
    }
  return detail::emit<T>(Op::ReduceSumAxis, {&x}, std::move(so), std::move(out),
                         axis);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw_usage("reshape: cannot view " + shape_str(x.shape()) + " as " +
                shape_str(shape));
  std::vector<T> out(x.values());
  return detail::emit<T>(Op::Reshape, {&x}, std::move(shape), std::move(out));
}

// [A,X,Y,D] -> [A,Y,X,D]; used to bring prompt-expanded embeddings into
// the batch/prompt/column/depth layout.
template <typename T>
Tensor<T> swap_middle_axes(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4)
    throw_usage("swap_middle_axes: rank-4 input required, got " + shape_str(s));
  std::size_t A = s[0], X = s[1], Y = s[2], D = s[3];
  Shape so{A, Y, X, D};
  std::vector<T> out(x.size());
  const T* xv = x.data();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t i = 0; i < X; ++i)
      for (std::size_t j = 0; j < Y; ++j) {
        const T* row = xv + ((a * X + i) * Y + j) * D;
        T* orow = out.data() + ((a * Y + j) * X + i) * D;
        std::copy(row, row + D, orow);
      }
  return detail::emit<T>(Op::SwapMiddleAxes, {&x}, std::move(so),
                         std::move(out));
}

// table[V,d] gathered by row indices -> [N,d]. Backward scatter-adds into
// the looked-up rows only.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<std::size_t> idx) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw_usage("gather_rows: table must be rank 2");
  std::size_t width = s[1];
  for (std::size_t r : idx)
    if (r >= s[0])
      throw_usage("gather_rows: row " + std::to_string(r) +
                  " out of range for table " + shape_str(s));
  std::vector<T> out(idx.size() * width);
  const T* tv = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(tv + idx[r] * width, tv + (idx[r] + 1) * width,
              out.data() + r * width);
  Shape so{idx.size(), width};
  return detail::emit<T>(Op::GatherRows, {&table}, std::move(so), std::move(out),
                         0, T(0),
                         std::make_shared<std::vector<std::size_t>>(std::move(idx)));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  std::vector<T> out(x.size());
  const T* xv = x.data();
  T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * f;
  return detail::emit<T>(Op::Scale, {&x}, x.shape(), std::move(out), 0, f);
}

// Mean over the batch of -log softmax(logits)[label]; scalar output.
template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits,
                                    std::vector<std::size_t> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw_usage("cross_entropy: logits must be [B,T]");
  std::size_t batch = s[0], classes = s[1];
  if (labels.size() != batch)
    throw_usage("cross_entropy: " + std::to_string(labels.size()) +
                " labels for batch " + std::to_string(batch));
  for (std::size_t y : labels)
    if (y >= classes)
      throw_usage("cross_entropy: label " + std::to_string(y) +
                  " out of range for " + std::to_string(classes) + " classes");
  const T* lv = logits.data();
  T total = T(0);
  for (std::size_t r = 0; r < batch; ++r) {
    const T* row = lv + r * classes;
    T mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < classes; ++j) denom += std::exp(row[j] - mx);
    total += mx + std::log(denom) - row[labels[r]];
  }
  std::vector<T> out{total / static_cast<T>(batch)};
  return detail::emit<T>(Op::CrossEntropy, {&logits}, Shape{}, std::move(out),
                         0, T(0),
                         std::make_shared<std::vector<std::size_t>>(std::move(labels)));
}

// Max relative error between the analytic gradient of f at x and central
// finite differences: |a - n| / max(1, |a|, |n|), maximized over
// coordinates. f must build a scalar from the recorded leaf it is given.
template <typename T>
double gradient_check(
    const std::function<Tensor<T>(Graph<T>&, const Tensor<T>&)>& f,
    const Tensor<T>& x, double eps = 1e-5) {
  if (eps <= 0) throw_usage("gradient_check: eps must be positive");

  Graph<T> g;
  Tensor<T> xr = g.leaf(x, true);
  Tensor<T> loss = f(g, xr);
  auto grads = g.backward(loss);
  const Tensor<T>& analytic = grads.at(xr.node());

  auto eval_at = [&](const std::vector<T>& vals) {
    Graph<T> gg;
    Tensor<T> probe(x.shape(), vals);
    Tensor<T> out = f(gg, gg.leaf(probe, false));
    if (!out.is_scalar())
      throw_usage("gradient_check: f must be scalar-valued");
    double v = static_cast<double>(out.item());
    if (!std::isfinite(v)) throw_numeric("gradient_check: f non-finite at probe");
    return v;
  };

  std::vector<T> probe(x.values());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    T keep = probe[i];
    probe[i] = keep + static_cast<T>(eps);
    double up = eval_at(probe);
    probe[i] = keep - static_cast<T>(eps);
    double down = eval_at(probe);
    probe[i] = keep;
    double numeric = (up - down) / (2.0 * eps);
    double a = static_cast<double>(analytic.at(i));
    double err = std::abs(a - numeric) /
                 std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, -1.0));
}

}  // namespace trompt
